//! Quadtree attention: coarse-to-fine top-k key selection over token
//! pyramids, stacked into alternating self/cross blocks.
//!
//! For every fine query the coarsest level scores all key tokens. The top k
//! are refined: their four children become the candidates one level down,
//! while the remaining candidates contribute their values at the current
//! level. At the finest level the top k candidates contribute. Scores are a
//! softmax over each candidate set, and the message is
//! `Σ_l λ_l Σ p v / Σ_l λ_l Σ p` with `λ = softmax(level logits)`. When
//! every k covers its level this reduces to dense attention.

use crate::config::{AttentionConfig, BlockKind};
use crate::error::{Error, Result};
use crate::params::{ParamSpec, Params};
use matchflow_tensor::kernels::{dot, gemm};
use matchflow_tensor::{CustomOp, Real, Tape, Tensor, TensorError, Var};

/// Initial scale of each block's residual branch.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Parameters of every attention block.
pub fn param_specs(cfg: &AttentionConfig, c: usize) -> Vec<ParamSpec> {
    let mut s = Vec::new();
    for b in 0..cfg.blocks.len() {
        let p = format!("attn.{b}");
        for w in ["wq", "wk", "wv"] {
            s.push(ParamSpec::linear(format!("{p}.{w}"), c, c, 0.5f64.sqrt()));
        }
        s.push(ParamSpec::linear(format!("{p}.wo"), c, c, 0.5f64.sqrt()));
        s.push(ParamSpec::ones(format!("{p}.ln1.g"), &[c]));
        s.push(ParamSpec::zeros(format!("{p}.ln1.b"), &[c]));
        s.push(ParamSpec::linear(format!("{p}.w1"), 2 * c, c, 1.0));
        s.push(ParamSpec::zeros(format!("{p}.b1"), &[c]));
        s.push(ParamSpec::linear(format!("{p}.w2"), c, c, 0.5f64.sqrt()));
        s.push(ParamSpec::zeros(format!("{p}.b2"), &[c]));
        s.push(ParamSpec::constant(format!("{p}.ln2.g"), &[c], RESIDUAL_GAIN));
        s.push(ParamSpec::zeros(format!("{p}.ln2.b"), &[c]));
        s.push(ParamSpec::zeros(format!("{p}.lw"), &[cfg.levels]));
    }
    s
}

/// Row-stochastic `softmax(q kᵀ / √c)` for `q[n×c]`, `k[m×c]`.
pub fn coarse_scores<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if q.ndim() != 2 || k.ndim() != 2 || q.shape()[1] != k.shape()[1] {
        return Err(TensorError::Dimension(format!("coarse_scores shapes {:?} and {:?}", q.shape(), k.shape())).into());
    }
    let (n, c, m) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    let scale = T::one() / T::lit(c as f64).sqrt();
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        let qi = &q.data()[i * c..(i + 1) * c];
        let row = &mut out.data_mut()[i * m..(i + 1) * m];
        for (j, r) in row.iter_mut().enumerate() {
            *r = dot(qi, &k.data()[j * c..(j + 1) * c]) * scale;
        }
        softmax_in_place(row);
    }
    Ok(out)
}

fn softmax_in_place<T: Real>(z: &mut [T]) {
    let mx = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in z.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Indices of the `k` highest scores, ascending; ties go to the lower index
/// and `k` is clamped to the number of scores.
pub fn topk_select<T: Real>(scores: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    topk_positions(scores, k, &mut idx);
    idx
}

/// Reorders `order` (positions into `scores`) so its first `k` entries are the
/// winners, then truncates and sorts them.
fn topk_positions<T: Real>(scores: &[T], k: usize, order: &mut Vec<usize>) {
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
    order.sort_unstable();
}

/// Per-level token pyramids, level 0 finest. Each tensor is `[h_l·w_l × C]`.
#[derive(Clone, Debug)]
pub struct PyramidSet<T: Real> {
    pub q: Vec<Tensor<T>>,
    pub k: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// `(h, w)` of level 0.
    pub grid: (usize, usize),
}

/// Score evaluations per level, summed over all fine queries and heads.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuadtreeStats {
    pub evaluations: Vec<usize>,
    pub queries: usize,
}

struct LevelTrace<T> {
    level: usize,
    anchor: usize,
    cand: Vec<usize>,
    p: Vec<T>,
    contrib: Vec<bool>,
}

struct QueryTrace<T> {
    levels: Vec<LevelTrace<T>>,
    denom: T,
}

fn level_dims(grid: (usize, usize), l: usize) -> (usize, usize) {
    (grid.0 >> l, grid.1 >> l)
}

fn check_pyramids<T: Real>(p: &PyramidSet<T>, cfg: &AttentionConfig) -> Result<usize> {
    let levels = cfg.levels;
    if p.q.len() != levels || p.k.len() != levels || p.v.len() != levels {
        return Err(Error::Contract(format!("pyramid needs {levels} levels")));
    }
    let (h, w) = p.grid;
    let f = 1usize << (levels - 1);
    if h % f != 0 || w % f != 0 || h == 0 || w == 0 {
        return Err(TensorError::Dimension(format!("{h}x{w} token grid is not divisible by {f} for {levels} levels")).into());
    }
    let c = p.q[0].shape().get(1).copied().unwrap_or(0);
    if c % cfg.heads != 0 {
        return Err(Error::Config(format!("{} heads do not divide {c} channels", cfg.heads)));
    }
    for l in 0..levels {
        let (hl, wl) = level_dims(p.grid, l);
        for t in [&p.q[l], &p.k[l], &p.v[l]] {
            if t.shape() != [hl * wl, c] {
                return Err(TensorError::Dimension(format!("level {l} expects [{}, {c}], got {:?}", hl * wl, t.shape())).into());
            }
        }
    }
    Ok(c)
}

fn run<T: Real>(
    p: &PyramidSet<T>,
    lambda: &[T],
    cfg: &AttentionConfig,
    keep_trace: bool,
) -> Result<(Tensor<T>, QuadtreeStats, Vec<QueryTrace<T>>)> {
    let c = check_pyramids(p, cfg)?;
    let levels = cfg.levels;
    let hd = c / cfg.heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let (h, w) = p.grid;
    let n = h * w;
    let mut out = Tensor::zeros(&[n, c]);
    let mut stats = QuadtreeStats { evaluations: vec![0; levels], queries: n };
    let mut traces = Vec::new();
    let mut num = vec![T::zero(); hd];
    let mut z = Vec::new();
    let mut order = Vec::new();
    for i in 0..n {
        let (yi, xi) = (i / w, i % w);
        for head in 0..cfg.heads {
            let off = head * hd;
            num.fill(T::zero());
            let mut denom = T::zero();
            let (_, wc) = level_dims(p.grid, levels - 1);
            let mut cand: Vec<usize> = (0..(h >> (levels - 1)) * wc).collect();
            let mut qt = QueryTrace { levels: Vec::new(), denom: T::zero() };
            for l in (0..levels).rev() {
                let (_, wl) = level_dims(p.grid, l);
                let anchor = (yi >> l) * wl + (xi >> l);
                let qa = &p.q[l].data()[anchor * c + off..anchor * c + off + hd];
                z.clear();
                z.extend(cand.iter().map(|&j| dot(qa, &p.k[l].data()[j * c + off..j * c + off + hd]) * scale));
                softmax_in_place(&mut z);
                stats.evaluations[l] += cand.len();
                order.clear();
                order.extend(0..cand.len());
                topk_positions(&z, cfg.k_at(l), &mut order);
                let mut contrib = vec![l > 0; cand.len()];
                for &pos in &order {
                    contrib[pos] = l == 0;
                }
                for (pos, &j) in cand.iter().enumerate() {
                    if contrib[pos] {
                        let wgt = lambda[l] * z[pos];
                        denom += wgt;
                        let vj = &p.v[l].data()[j * c + off..j * c + off + hd];
                        for (a, &b) in num.iter_mut().zip(vj) {
                            *a += wgt * b;
                        }
                    }
                }
                let next: Vec<usize> = if l > 0 {
                    let wf = wl * 2;
                    order
                        .iter()
                        .flat_map(|&pos| {
                            let j = cand[pos];
                            let (yj, xj) = (j / wl, j % wl);
                            [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| (2 * yj + dy) * wf + 2 * xj + dx)
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                if keep_trace {
                    qt.levels.push(LevelTrace { level: l, anchor, cand: cand.clone(), p: z.clone(), contrib });
                }
                if l > 0 {
                    cand = next;
                    cand.sort_unstable();
                }
            }
            let row = &mut out.data_mut()[i * c + off..i * c + off + hd];
            for (o, &a) in row.iter_mut().zip(&num) {
                *o = a / denom;
            }
            if keep_trace {
                qt.denom = denom;
                traces.push(qt);
            }
        }
    }
    Ok((out, stats, traces))
}

fn level_weights<T: Real>(logits: &[T]) -> Vec<T> {
    let mut l = logits.to_vec();
    softmax_in_place(&mut l);
    l
}

/// Quadtree message for every level-0 query, without recording a graph.
pub fn quadtree_forward<T: Real>(
    p: &PyramidSet<T>,
    level_logits: &[T],
    cfg: &AttentionConfig,
) -> Result<(Tensor<T>, QuadtreeStats)> {
    if level_logits.len() != cfg.levels {
        return Err(Error::Contract(format!("{} level logits for {} levels", level_logits.len(), cfg.levels)));
    }
    let (out, stats, _) = run(p, &level_weights(level_logits), cfg, false)?;
    Ok((out, stats))
}

struct QuadtreeOp<T: Real> {
    traces: Vec<QueryTrace<T>>,
    lambda: Vec<T>,
    levels: usize,
    heads: usize,
}

impl<T: Real> CustomOp<T> for QuadtreeOp<T> {
    fn name(&self) -> &'static str {
        "quadtree_attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> matchflow_tensor::Result<Vec<Option<Tensor<T>>>> {
        let lv = self.levels;
        let (q, k, v) = (&inputs[..lv], &inputs[lv..2 * lv], &inputs[2 * lv..3 * lv]);
        let c = output.shape()[1];
        let hd = c / self.heads;
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut dq: Vec<Tensor<T>> = q.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut dk: Vec<Tensor<T>> = k.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut dv: Vec<Tensor<T>> = v.iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut dlambda = vec![T::zero(); lv];
        let mut dn = vec![T::zero(); hd];
        let mut dp = Vec::new();
        for (t, trace) in self.traces.iter().enumerate() {
            let (i, head) = (t / self.heads, t % self.heads);
            let off = head * hd;
            let g = &grad_output.data()[i * c + off..i * c + off + hd];
            let o = &output.data()[i * c + off..i * c + off + hd];
            let inv = T::one() / trace.denom;
            for (d, &gv) in dn.iter_mut().zip(g) {
                *d = gv * inv;
            }
            let dd = -dot(g, o) * inv;
            for lt in &trace.levels {
                let l = lt.level;
                let lam = self.lambda[l];
                dp.clear();
                for (pos, &j) in lt.cand.iter().enumerate() {
                    if !lt.contrib[pos] {
                        dp.push(T::zero());
                        continue;
                    }
                    let vj = &v[l].data()[j * c + off..j * c + off + hd];
                    let s = dot(&dn, vj) + dd;
                    dlambda[l] += lt.p[pos] * s;
                    dp.push(lam * s);
                    let w = lam * lt.p[pos];
                    for (a, &b) in dv[l].data_mut()[j * c + off..j * c + off + hd].iter_mut().zip(&dn) {
                        *a += w * b;
                    }
                }
                let mean: T = lt.p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qa: Vec<T> = q[l].data()[lt.anchor * c + off..lt.anchor * c + off + hd].to_vec();
                for (pos, &j) in lt.cand.iter().enumerate() {
                    let dz = lt.p[pos] * (dp[pos] - mean) * scale;
                    if dz == T::zero() {
                        continue;
                    }
                    let kj = j * c + off;
                    for d in 0..hd {
                        dq[l].data_mut()[lt.anchor * c + off + d] += dz * k[l].data()[kj + d];
                        dk[l].data_mut()[kj + d] += dz * qa[d];
                    }
                }
            }
        }
        let s: T = self.lambda.iter().zip(&dlambda).map(|(&a, &b)| a * b).sum();
        let dlogits = Tensor::new(&[lv], self.lambda.iter().zip(&dlambda).map(|(&a, &b)| a * (b - s)).collect())?;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(3 * lv + 1);
        grads.extend(dq.into_iter().map(Some));
        grads.extend(dk.into_iter().map(Some));
        grads.extend(dv.into_iter().map(Some));
        grads.push(Some(dlogits));
        Ok(grads)
    }
}

/// Tape handles for one set of pyramids.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub q: Vec<Var>,
    pub k: Vec<Var>,
    pub v: Vec<Var>,
    pub grid: (usize, usize),
}

/// Records the quadtree message `[N×C]` on the tape.
pub fn quadtree_attention<T: Real>(
    g: &mut Tape<T>,
    pyr: &PyramidVars,
    level_logits: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, QuadtreeStats)> {
    let set = PyramidSet {
        q: pyr.q.iter().map(|&v| g.value(v).clone()).collect(),
        k: pyr.k.iter().map(|&v| g.value(v).clone()).collect(),
        v: pyr.v.iter().map(|&v| g.value(v).clone()).collect(),
        grid: pyr.grid,
    };
    let logits = g.value(level_logits).data().to_vec();
    if logits.len() != cfg.levels {
        return Err(Error::Contract(format!("{} level logits for {} levels", logits.len(), cfg.levels)));
    }
    let lambda = level_weights(&logits);
    let (out, stats, traces) = run(&set, &lambda, cfg, true)?;
    let mut inputs = pyr.q.clone();
    inputs.extend(&pyr.k);
    inputs.extend(&pyr.v);
    inputs.push(level_logits);
    let op = QuadtreeOp { traces, lambda, levels: cfg.levels, heads: cfg.heads };
    Ok((g.custom(&inputs, out, Box::new(op))?, stats))
}

/// `[C×h×w]` map to `[h·w × C]` tokens.
pub fn to_tokens<T: Real>(g: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    let r = g.reshape(f, &[s[0], s[1] * s[2]])?;
    Ok(g.transpose(r)?)
}

/// `[h·w × C]` tokens back to a `[C×h×w]` map.
pub fn from_tokens<T: Real>(g: &mut Tape<T>, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = g.shape(t)[1];
    let tr = g.transpose(t)?;
    Ok(g.reshape(tr, &[c, h, w])?)
}

/// Builds `levels` pyramid levels by repeated 2×2 average pooling.
pub fn token_pyramid<T: Real>(g: &mut Tape<T>, t: Var, grid: (usize, usize), levels: usize) -> Result<Vec<Var>> {
    let mut out = vec![t];
    let mut cur = from_tokens(g, t, grid.0, grid.1)?;
    for _ in 1..levels {
        cur = g.avg_pool2(cur)?;
        out.push(to_tokens(g, cur)?);
    }
    Ok(out)
}

/// Per-token linear projections `Q = x Wq`, `K = s Wk`, `V = s Wv`.
pub fn project_qkv<T: Real>(g: &mut Tape<T>, x: Var, s: Var, wq: Var, wk: Var, wv: Var) -> Result<(Var, Var, Var)> {
    if g.shape(x) != g.shape(s) {
        return Err(TensorError::Dimension(format!("query tokens {:?} and source tokens {:?} differ", g.shape(x), g.shape(s))).into());
    }
    Ok((g.matmul(x, wq)?, g.matmul(s, wk)?, g.matmul(s, wv)?))
}

/// One block: `x + LN(W2 relu(W1 [x; LN(Wo msg)] + b1) + b2)`.
pub fn attention_block<T: Real>(
    g: &mut Tape<T>,
    p: &Params,
    b: usize,
    x: Var,
    s: Var,
    grid: (usize, usize),
    cfg: &AttentionConfig,
) -> Result<(Var, QuadtreeStats)> {
    let n = |w: &str| format!("attn.{b}.{w}");
    let (q, k, v) = project_qkv(g, x, s, p[&n("wq")], p[&n("wk")], p[&n("wv")])?;
    let pyr = PyramidVars {
        q: token_pyramid(g, q, grid, cfg.levels)?,
        k: token_pyramid(g, k, grid, cfg.levels)?,
        v: token_pyramid(g, v, grid, cfg.levels)?,
        grid,
    };
    let (msg, stats) = quadtree_attention(g, &pyr, p[&n("lw")], cfg)?;
    let msg = g.matmul(msg, p[&n("wo")])?;
    let msg = g.layer_norm(msg, p[&n("ln1.g")], p[&n("ln1.b")])?;
    let cat = g.concat(&[x, msg], 1)?;
    let h = g.matmul(cat, p[&n("w1")])?;
    let h = g.add_bias(h, p[&n("b1")], 1)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, p[&n("w2")])?;
    let h = g.add_bias(h, p[&n("b2")], 1)?;
    let h = g.layer_norm(h, p[&n("ln2.g")], p[&n("ln2.b")])?;
    Ok((g.add(x, h)?, stats))
}

/// Applies every configured block to both maps `[C×h×w]`.
///
/// Self blocks attend within each map; cross blocks attend from each map to
/// the other, both computed from the maps as they were before the block.
pub fn attention_stack<T: Real>(g: &mut Tape<T>, p: &Params, cfg: &AttentionConfig, f1: Var, f2: Var) -> Result<(Var, Var)> {
    if g.shape(f1) != g.shape(f2) {
        return Err(TensorError::Dimension(format!("feature maps {:?} and {:?} differ", g.shape(f1), g.shape(f2))).into());
    }
    if cfg.blocks.is_empty() {
        return Ok((f1, f2));
    }
    let s = g.shape(f1).to_vec();
    if s.len() != 3 {
        return Err(TensorError::Dimension(format!("feature map must be [C,h,w], got {s:?}")).into());
    }
    let grid = (s[1], s[2]);
    let mut a = to_tokens(g, f1)?;
    let mut b = to_tokens(g, f2)?;
    for (i, kind) in cfg.blocks.iter().enumerate() {
        let (na, nb) = match kind {
            BlockKind::SelfAttention => (attention_block(g, p, i, a, a, grid, cfg)?.0, attention_block(g, p, i, b, b, grid, cfg)?.0),
            BlockKind::CrossAttention => (attention_block(g, p, i, a, b, grid, cfg)?.0, attention_block(g, p, i, b, a, grid, cfg)?.0),
        };
        a = na;
        b = nb;
    }
    Ok((from_tokens(g, a, grid.0, grid.1)?, from_tokens(g, b, grid.0, grid.1)?))
}

/// Dense single-level attention `softmax(q kᵀ/√d) v`, per head.
pub fn dense_attention<T: Real>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, heads: usize) -> Tensor<T> {
    let (n, c, m) = (q.shape()[0], q.shape()[1], k.shape()[0]);
    let hd = c / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = Tensor::zeros(&[n, c]);
    let mut z = vec![T::zero(); m];
    let mut acc = vec![T::zero(); hd];
    for i in 0..n {
        for head in 0..heads {
            let off = head * hd;
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = dot(&q.data()[i * c + off..i * c + off + hd], &k.data()[j * c + off..j * c + off + hd]) * scale;
            }
            softmax_in_place(&mut z);
            acc.fill(T::zero());
            for (j, &pj) in z.iter().enumerate() {
                for (a, &b) in acc.iter_mut().zip(&v.data()[j * c + off..j * c + off + hd]) {
                    *a += pj * b;
                }
            }
            out.data_mut()[i * c + off..i * c + off + hd].copy_from_slice(&acc);
        }
    }
    out
}

/// Plain `[n×k]·[k×m]` on tensors, used to build pyramids outside a tape.
pub fn project<T: Real>(x: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (n, k, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
    let mut out = Tensor::zeros(&[n, m]);
    gemm(x.data(), w.data(), out.data_mut(), n, k, m);
    out
}
