//! Gradient checks and oracle equivalences behind `matchflow selftest`.

use crate::attention::{attention_stack, dense_attention, project, quadtree_forward, token_pyramid, PyramidSet};
use crate::config::{AttentionConfig, ModelConfig};
use crate::encoder::ContextVars;
use crate::error::Result;
use crate::eval::aepe;
use crate::flow::{flow_loss, iterate, loss_weights};
use crate::matching::{correlation_volume, dual_softmax, matching_loss, GtMatches, TEMPERATURE};
use crate::params::{ModelWeights, Params};
use crate::tile::{blend, pixel_weight, split_patches, SIGMA};
use matchflow_tensor::{grad_check, GradCheckConfig, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest relative error accepted from a gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// One named measurement against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    fn new(name: impl Into<String>, error: f64, tolerance: f64) -> Self {
        Self { name: name.into(), error, tolerance }
    }

    /// NaN errors fail.
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0) * scale)
}

fn lift<T>(r: Result<T>) -> matchflow_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

fn grad(name: &str, params: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> matchflow_tensor::Result<Var>) -> Result<Check> {
    let r = grad_check(f, &params, &GradCheckConfig::default())?;
    Ok(Check::new(format!("grad {name}"), r.max_rel_error, GRAD_TOLERANCE))
}

/// `Σ v ⊙ w` with a fixed random `w`, so every output element matters.
fn probe(g: &mut Tape<f64>, v: Var, seed: u64) -> matchflow_tensor::Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape, 1.0));
    let p = g.mul(v, w)?;
    g.sum(p)
}

type UnaryOp = fn(&mut Tape<f64>, Var) -> matchflow_tensor::Result<Var>;

/// Finite-difference checks of every tape op in 64-bit.
pub fn op_gradients() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let x = rand_tensor(&mut rng, &[3, 4], 1.0);
    let y = rand_tensor(&mut rng, &[3, 4], 1.0);
    let mut out = Vec::new();

    let binary: [(&str, fn(&mut Tape<f64>, Var, Var) -> matchflow_tensor::Result<Var>); 3] =
        [("add", |g, a, b| g.add(a, b)), ("sub", |g, a, b| g.sub(a, b)), ("mul", |g, a, b| g.mul(a, b))];
    for (i, (name, op)) in binary.into_iter().enumerate() {
        out.push(grad(name, vec![x.clone(), y.clone()], |g, p| {
            let v = op(g, p[0], p[1])?;
            probe(g, v, i as u64)
        })?);
    }
    let unary: [(&str, UnaryOp); 7] = [
        ("scale", |g, a| g.scale(a, -2.5)),
        ("add_scalar", |g, a| g.add_scalar(a, 0.75)),
        ("relu", |g, a| g.relu(a)),
        ("sigmoid", |g, a| g.sigmoid(a)),
        ("tanh", |g, a| g.tanh(a)),
        ("abs", |g, a| g.abs(a)),
        ("square", |g, a| g.square(a)),
    ];
    for (i, (name, op)) in unary.into_iter().enumerate() {
        out.push(grad(name, vec![x.clone()], |g, p| {
            let v = op(g, p[0])?;
            probe(g, v, 10 + i as u64)
        })?);
    }
    out.push(grad("log_clamped", vec![x.map(|v| v.abs() + 0.2)], |g, p| {
        let v = g.log_clamped(p[0], 1e-12)?;
        probe(g, v, 20)
    })?);
    out.push(grad("mean", vec![x.clone()], |g, p| {
        let v = g.square(p[0])?;
        g.mean(v)
    })?);

    let a = rand_tensor(&mut rng, &[3, 5], 1.0);
    let b = rand_tensor(&mut rng, &[5, 2], 1.0);
    out.push(grad("matmul", vec![a.clone(), b], |g, p| {
        let v = g.matmul(p[0], p[1])?;
        probe(g, v, 21)
    })?);
    out.push(grad("transpose", vec![a.clone()], |g, p| {
        let v = g.transpose(p[0])?;
        probe(g, v, 22)
    })?);
    for axis in 0..2 {
        out.push(grad(&format!("softmax axis {axis}"), vec![a.clone()], |g, p| {
            let v = g.softmax(p[0], axis, 0.3)?;
            probe(g, v, 23 + axis as u64)
        })?);
    }
    out.push(grad("concat+slice", vec![a.clone(), rand_tensor(&mut rng, &[3, 2], 1.0)], |g, p| {
        let c = g.concat(&[p[0], p[1]], 1)?;
        let s = g.slice(c, 1, 2, 4)?;
        probe(g, s, 25)
    })?);
    out.push(grad("reshape+gather", vec![a.clone()], |g, p| {
        let r = g.reshape(p[0], &[15])?;
        let s = g.gather(r, &[0, 4, 4, 14])?;
        probe(g, s, 26)
    })?);
    out.push(grad("add_bias", vec![rand_tensor(&mut rng, &[2, 3, 4], 1.0), rand_tensor(&mut rng, &[3], 1.0)], |g, p| {
        let v = g.add_bias(p[0], p[1], 1)?;
        probe(g, v, 27)
    })?);
    let ln = vec![a, rand_tensor(&mut rng, &[5], 1.0), rand_tensor(&mut rng, &[5], 1.0)];
    out.push(grad("layer_norm", ln, |g, p| {
        let v = g.layer_norm(p[0], p[1], p[2])?;
        probe(g, v, 28)
    })?);
    out.push(grad("avg_pool2", vec![rand_tensor(&mut rng, &[2, 4, 6], 1.0)], |g, p| {
        let v = g.avg_pool2(p[0])?;
        probe(g, v, 29)
    })?);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let params = vec![rand_tensor(&mut rng, &[2, 6, 5], 1.0), rand_tensor(&mut rng, &[3, 2, k, k], 1.0)];
        out.push(grad(&format!("conv2d k{k} s{stride} p{pad}"), params, |g, p| {
            let v = g.conv2d(p[0], p[1], stride, pad)?;
            probe(g, v, 30)
        })?);
    }
    Ok(out)
}

/// Binds every weight as a constant except `checked`, which map to `vars`.
fn bind_checked(g: &mut Tape<f64>, w: &ModelWeights, checked: &[&str], vars: &[Var]) -> Params {
    Params::from_vars(w.iter().map(|(n, t)| {
        let v = match checked.iter().position(|c| c == n) {
            Some(i) => vars[i],
            None => g.constant(t.cast::<f64>()),
        };
        (n.clone(), v)
    }))
}

fn weight_tensors(w: &ModelWeights, names: &[&str]) -> Result<Vec<Tensor<f64>>> {
    names
        .iter()
        .map(|n| w.get(n).map(|t| t.cast::<f64>()).ok_or_else(|| crate::Error::Config(format!("missing parameter {n}"))))
        .collect()
}

/// Gradient checks of the composed matching, refinement and attention graphs.
pub fn model_gradients() -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let mut out = Vec::new();

    let gt = GtMatches(vec![(0, 0), (1, 2), (3, 3)]);
    let params = vec![rand_tensor(&mut rng, &[4, 2, 2], 0.4), rand_tensor(&mut rng, &[4, 2, 2], 0.4)];
    out.push(grad("matching loss on 2x2 grids", params, |g, p| {
        let c = lift(correlation_volume(g, p[0], p[1], false))?;
        let prob = lift(dual_softmax(g, c, TEMPERATURE))?;
        lift(matching_loss(g, prob, &gt))
    })?);

    let cfg = ModelConfig::tiny();
    let w = ModelWeights::init(&cfg, 7)?;
    let names = ["upd.mc.w", "upd.mo.w", "upd.gz.w", "upd.gr.w", "upd.gq.w", "upd.h1.w", "upd.h2.w", "upd.h2.b"];
    let (c, hd, cx) = (cfg.channels(), cfg.flow.hidden, cfg.flow.context);
    let gt = rand_tensor(&mut rng, &[2, 4, 4], 1.5);
    let mut params = vec![
        rand_tensor(&mut rng, &[c, 4, 4], 1.0),
        rand_tensor(&mut rng, &[c, 4, 4], 1.0),
        rand_tensor(&mut rng, &[hd, 4, 4], 0.8),
        rand_tensor(&mut rng, &[cx, 4, 4], 0.8).map(f64::abs),
    ];
    params.extend(weight_tensors(&w, &names)?);
    // Pushes the second lookup away from integer positions.
    params[4 + 6] = params[4 + 6].map(|v| v * 20.0);
    out.push(grad("flow loss through 2 GRU iterations", params, |g, p| {
        let pr = bind_checked(g, &w, &names, &p[4..]);
        let ctx = ContextVars { hidden: p[2], context: p[3] };
        let trace = lift(iterate(g, &pr, &cfg.flow, p[0], p[1], ctx, 2, false))?;
        lift(flow_loss(g, &trace.flows, &gt, 0.8, None))
    })?);

    let w = ModelWeights::init(&cfg, 3)?;
    let names = [
        "attn.0.wq", "attn.0.wk", "attn.0.wv", "attn.0.wo", "attn.0.w1", "attn.0.ln2.g", "attn.0.lw", "attn.1.wq",
        "attn.1.wv", "attn.1.w2", "attn.1.ln1.g", "attn.1.lw",
    ];
    let mut params = vec![rand_tensor(&mut rng, &[c, 8, 8], 1.0), rand_tensor(&mut rng, &[c, 8, 8], 1.0)];
    params.extend(weight_tensors(&w, &names)?);
    params[2 + 6] = rand_tensor(&mut rng, &[cfg.attention.levels], 0.5);
    let (wa, wb) = (rand_tensor(&mut rng, &[c, 8, 8], 1.0), rand_tensor(&mut rng, &[c, 8, 8], 1.0));
    out.push(grad("self and cross quadtree blocks", params, |g, p| {
        let pr = bind_checked(g, &w, &names, &p[2..]);
        let (a, b) = lift(attention_stack(g, &pr, &cfg.attention, p[0], p[1]))?;
        let (wa, wb) = (g.constant(wa.clone()), g.constant(wb.clone()));
        let (x, y) = (g.mul(a, wa)?, g.mul(b, wb)?);
        let s = g.add(x, y)?;
        g.sum(s)
    })?);
    Ok(out)
}

fn pyramid(t: &Tensor<f64>, grid: (usize, usize), levels: usize) -> Result<Vec<Tensor<f64>>> {
    let mut g = Tape::new();
    let v = g.constant(t.clone());
    let pyr = token_pyramid(&mut g, v, grid, levels)?;
    Ok(pyr.into_iter().map(|v| g.value(v).clone()).collect())
}

/// Relative error of quadtree attention against dense attention for one
/// random case whose `k` keeps every token at every level.
pub fn dense_oracle_case(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = rng.random_range(1..=3usize);
    let f = 1 << (levels - 1);
    let (h, w) = (f * rng.random_range(1..=8 / f), f * rng.random_range(1..=8 / f));
    let heads = rng.random_range(1..=2usize);
    let c = heads * rng.random_range(1..=4usize);
    let fs = rand_tensor(&mut rng, &[h * w, c], 1.5);
    let ft = rand_tensor(&mut rng, &[h * w, c], 1.5);
    let (wq, wk, wv) = (rand_tensor(&mut rng, &[c, c], 1.0), rand_tensor(&mut rng, &[c, c], 1.0), rand_tensor(&mut rng, &[c, c], 1.0));
    let (q, k, v) = (project(&fs, &wq), project(&ft, &wk), project(&ft, &wv));
    let k_per_level = (0..levels).rev().map(|l| ((h * w) >> (2 * l)) + rng.random_range(0..3)).collect();
    let cfg = AttentionConfig { levels, k_per_level, heads, blocks: vec![] };
    let logits: Vec<f64> = (0..levels).map(|_| rng.random_range(-1.0..1.0)).collect();
    let set = PyramidSet { q: pyramid(&q, (h, w), levels)?, k: pyramid(&k, (h, w), levels)?, v: pyramid(&v, (h, w), levels)?, grid: (h, w) };
    let (out, _) = quadtree_forward(&set, &logits, &cfg)?;
    let dense = dense_attention(&q, &k, &v, heads);
    let scale = dense.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    Ok(out.max_abs_diff(&dense) / scale)
}

/// Independent `−mean log P` on a random volume against the tape loss.
fn matching_loss_recomputed(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (rng.random_range(2..6usize), rng.random_range(2..6usize));
    let corr = rand_tensor(&mut rng, &[n, m], 0.5);
    let mut pairs = Vec::new();
    for i in 0..n {
        if i == 0 || rng.random_bool(0.7) {
            pairs.push((i, rng.random_range(0..m)));
        }
    }
    let gt = GtMatches(pairs);
    let mut g = Tape::new();
    let c = g.constant(corr.clone());
    let p = dual_softmax(&mut g, c, TEMPERATURE)?;
    let loss = matching_loss(&mut g, p, &gt)?;
    let loss = g.value(loss).item();

    let e = |i: usize, j: usize| (corr.at(&[i, j]) / TEMPERATURE).exp();
    let mut direct = 0.0;
    for &(i, j) in &gt.0 {
        let row: f64 = (0..m).map(|jj| e(i, jj)).sum();
        let col: f64 = (0..n).map(|ii| e(ii, j)).sum();
        direct -= (e(i, j) / row * e(i, j) / col).ln();
    }
    direct /= gt.0.len() as f64;
    Ok((loss - direct).abs())
}

/// Closed-form anchors and reference equivalences.
pub fn oracles() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let worst = (0..50).map(dense_oracle_case).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    out.push(Check::new("quadtree equals dense attention (50 cases)", worst, 1e-5));

    let mut g = Tape::<f64>::new();
    let c = g.constant(Tensor::eye(2));
    let p = dual_softmax(&mut g, c, TEMPERATURE)?;
    out.push(Check::new("dual softmax identity anchor", (g.value(p).at(&[0, 0]) - 0.9999092).abs(), 1e-5));

    let worst = (0..20).map(matching_loss_recomputed).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
    out.push(Check::new("matching loss recomputation", worst, 1e-10));

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let gt = rand_tensor(&mut rng, &[2, 4, 4], 3.0).map(|v| v.round());
    let mut g = Tape::<f64>::new();
    let flows = [g.constant(gt.map(|v| v + 1.0)), g.constant(gt.clone())];
    let l = flow_loss(&mut g, &flows, &gt, 0.8, None)?;
    let l = g.value(l).item();
    out.push(Check::new("flow loss hand case", (l - 1.6).abs(), 0.0));
    let mono = (1..30).all(|n| loss_weights(n, 0.8).windows(2).all(|w| w[0] <= w[1]));
    out.push(Check::new("loss weights non-decreasing", if mono { 0.0 } else { 1.0 }, 0.0));

    let cw = pixel_weight(208, 368, (416, 736), SIGMA);
    out.push(Check::new("tile center weight", (cw - 7.9788).abs(), 1e-3));
    let plan = split_patches((416, 1000), (416, 736))?;
    out.push(Check::new("tile split starts", if plan.starts == [(0, 0), (0, 264)] { 0.0 } else { 1.0 }, 0.0));
    let plan = split_patches((100, 130), (64, 96))?;
    let patch = Tensor::from_fn(&[2, 64, 96], |i| if i < 64 * 96 { 0.3f32 } else { -1.7 });
    let blended = blend(&vec![patch; plan.starts.len()], &plan, SIGMA)?;
    let (u, v) = blended.data().split_at(100 * 130);
    let err = u.iter().map(|&x| (x - 0.3).abs()).chain(v.iter().map(|&x| (x + 1.7).abs())).fold(0.0f32, f32::max);
    out.push(Check::new("constant flow blends exactly", err as f64, 0.0));

    let pred = Tensor::<f32>::zeros(&[2, 1, 1]);
    let gt = Tensor::new(&[2, 1, 1], vec![3.0f32, 4.0])?;
    out.push(Check::new("aepe 3-4-5", (aepe(&pred, &gt, None)? - 5.0).abs(), 0.0));
    Ok(out)
}

/// Every check, in a fixed order.
pub fn run_all() -> Result<Vec<Check>> {
    let mut out = op_gradients()?;
    out.extend(model_gradients()?);
    out.extend(oracles()?);
    Ok(out)
}
