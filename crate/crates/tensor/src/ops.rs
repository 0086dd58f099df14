use crate::error::{dim_err, Result, TensorError};
use crate::kernels::{self, axis_split, ConvGeom};
use crate::tape::Op;
use crate::{Real, Tape, Tensor, Var};

const LAYER_NORM_EPS: f64 = 1e-5;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shape preserved")
}

/// Largest value strictly below one, so bounded activations never saturate.
fn below_one<T: Real>() -> T {
    T::one() - T::epsilon()
}

/// Clamp that lets NaN through.
fn clamp_nan<T: Real>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "add")?;
        let out = zip_map(x, y, |p, q| p + q);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "sub")?;
        let out = zip_map(x, y, |p, q| p - q);
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, "mul")?;
        let out = zip_map(x, y, |p, q| p * q);
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Adds `bias[j]` to every element whose index along `axis` is `j`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return dim_err(format!("add_bias axis {axis} out of range for {:?}", xv.shape()));
        }
        let (outer, len, inner) = axis_split(xv.shape(), axis);
        let b = self.value(bias);
        if b.numel() != len {
            return dim_err(format!("bias of {} values for axis of length {len}", b.numel()));
        }
        let mut out = xv.clone();
        let bd = b.data();
        for o in 0..outer {
            for (j, &bj) in bd.iter().enumerate() {
                let base = (o * len + j) * inner;
                for v in &mut out.data_mut()[base..base + inner] {
                    *v += bj;
                }
            }
        }
        self.push(out, Op::AddBias { x, bias, axis })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(out, Op::Sigmoid(a))
    }

    /// Hyperbolic tangent kept strictly inside (−1, 1) even where the
    /// floating-point result would round to ±1.
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let hi = below_one::<T>();
        let out = self.value(a).map(|x| clamp_nan(x.tanh(), -hi, hi));
        self.push(out, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, a: Var, floor: T) -> Result<Var> {
        let out = self.value(a).map(|x| if x < floor { floor } else { x }.ln());
        self.push(out, Op::LogClamped { x: a, floor })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.ndim() != 2 || y.ndim() != 2 {
            return dim_err(format!("matmul needs 2-D operands, got {:?} and {:?}", x.shape(), y.shape()));
        }
        let (m, k, k2, n) = (x.shape()[0], x.shape()[1], y.shape()[0], y.shape()[1]);
        if k != k2 {
            return dim_err(format!("matmul inner dimensions {k} and {k2} differ"));
        }
        let mut out = Tensor::zeros(&[m, n]);
        kernels::gemm(x.data(), y.data(), out.data_mut(), m, k, n);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return dim_err(format!("transpose needs a 2-D operand, got {:?}", x.shape()));
        }
        let out = transpose2(x);
        self.push(out, Op::Transpose(a))
    }

    /// Softmax of `x / temperature` along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(TensorError::Contract(format!("softmax temperature must be positive, got {temperature}")));
        }
        let x = self.value(a);
        if axis >= x.ndim() {
            return dim_err(format!("softmax axis {axis} out of range for {:?}", x.shape()));
        }
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let mut out = Tensor::zeros(x.shape());
        kernels::softmax_axis(x.data(), out.data_mut(), outer, len, inner, temperature);
        self.push(out, Op::Softmax { x: a, axis, temperature })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s = x.sum() / T::lit(x.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Cross-correlation of `x[cin×h×w]` with `kernel[cout×cin×kh×kw]`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        if xv.ndim() != 3 || kv.ndim() != 4 {
            return dim_err(format!("conv2d needs [c,h,w] input and [o,c,kh,kw] kernel, got {:?} and {:?}", xv.shape(), kv.shape()));
        }
        let (cin, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, kc, kh, kw) = (kv.shape()[0], kv.shape()[1], kv.shape()[2], kv.shape()[3]);
        if kc != cin {
            return dim_err(format!("conv2d kernel expects {kc} input channels, input has {cin}"));
        }
        if stride == 0 {
            return Err(TensorError::Contract("conv2d stride must be at least 1".into()));
        }
        let Some(geom) = ConvGeom::new(cin, h, w, kh, kw, stride, padding) else {
            return dim_err(format!("conv2d kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding));
        };
        let p = geom.out_pixels();
        let k = geom.patch_len();
        let mut out = Tensor::zeros(&[cout, geom.ho, geom.wo]);
        let track = self.requires_grad(x) || self.requires_grad(kernel);
        let col = if geom.is_pointwise() {
            kernels::gemm(kv.data(), xv.data(), out.data_mut(), cout, k, p);
            None
        } else {
            let mut col = vec![T::zero(); k * p];
            kernels::im2col(xv.data(), &geom, &mut col);
            kernels::gemm(kv.data(), &col, out.data_mut(), cout, k, p);
            track.then_some(col)
        };
        self.push(out, Op::Conv2d { x, w: kernel, geom, col })
    }

    /// Mean over non-overlapping 2×2 blocks of the last two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let nd = x.ndim();
        if nd < 2 {
            return dim_err(format!("avg_pool2 needs at least 2 axes, got {:?}", x.shape()));
        }
        let (h, w) = (x.shape()[nd - 2], x.shape()[nd - 1]);
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("avg_pool2 needs even spatial dims, got {h}x{w}"));
        }
        let c: usize = x.shape()[..nd - 2].iter().product();
        let (ho, wo) = (h / 2, w / 2);
        let quarter = T::lit(0.25);
        let xd = x.data();
        let mut data = Vec::with_capacity(c * ho * wo);
        for ci in 0..c {
            let plane = &xd[ci * h * w..(ci + 1) * h * w];
            for y in 0..ho {
                let r0 = &plane[2 * y * w..(2 * y + 1) * w];
                let r1 = &plane[(2 * y + 1) * w..(2 * y + 2) * w];
                for xo in 0..wo {
                    data.push(((r0[2 * xo] + r0[2 * xo + 1]) + (r1[2 * xo] + r1[2 * xo + 1])) * quarter);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[nd - 2] = ho;
        shape[nd - 1] = wo;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::AvgPool2(a))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let mismatch = s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b);
            if mismatch {
                return dim_err(format!("concat: shape {s:?} incompatible with {base:?} along axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
            return dim_err(format!("slice {start}..{} on axis {axis} of {:?}", start + len, x.shape()));
        }
        let (outer, full, inner) = axis_split(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::Slice { x: a, axis, start })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a))
    }

    /// Picks flat elements of `x` into a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if idx.is_empty() {
            return dim_err("gather with no indices");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.numel()) {
            return dim_err(format!("gather index {bad} out of range for {} elements", x.numel()));
        }
        let data = idx.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(&[idx.len()], data)?;
        self.push(out, Op::Gather { x: a, idx: idx.to_vec() })
    }

    /// Row-wise layer normalization of `x[n×c]` with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 {
            return dim_err(format!("layer_norm needs [n,c], got {:?}", xv.shape()));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return dim_err(format!("layer_norm affine params must have {c} values"));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let cn = T::lit(c as f64);
        let mut xhat = vec![T::zero(); n * c];
        let mut inv_std = vec![T::zero(); n];
        let mut out = Tensor::zeros(&[n, c]);
        for r in 0..n {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let xh = (row[j] - mu) * is;
                xhat[r * c + j] = xh;
                out.data_mut()[r * c + j] = xh * g.data()[j] + b.data()[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Vector-Jacobian products of node `i` given its output gradient.
    pub(crate) fn backward_rule(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: &Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(b), |p, q| p * q)),
                (*b, zip_map(g, val(a), |p, q| p * q)),
            ],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::AddBias { x, bias, axis } => {
                let (outer, len, inner) = axis_split(g.shape(), *axis);
                let mut db = vec![T::zero(); len];
                for o in 0..outer {
                    for (j, d) in db.iter_mut().enumerate() {
                        let base = (o * len + j) * inner;
                        *d += g.data()[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                let bshape = val(bias).shape().to_vec();
                vec![(*x, g.clone()), (*bias, Tensor::new(&bshape, db)?)]
            }
            Op::Relu(a) => vec![(*a, zip_map(g, val(a), |d, x| if x > T::zero() { d } else { T::zero() }))],
            Op::Sigmoid(a) => {
                let fault = if cfg!(feature = "fault-injection") { T::lit(1.01) } else { T::one() };
                vec![(*a, zip_map(g, y, |d, s| d * s * (T::one() - s) * fault))]
            }
            Op::Tanh(a) => vec![(*a, zip_map(g, y, |d, t| d * (T::one() - t * t)))],
            Op::Abs(a) => vec![(*a, zip_map(g, val(a), |d, x| if x > T::zero() { d } else if x < T::zero() { -d } else { T::zero() }))],
            Op::Square(a) => vec![(*a, zip_map(g, val(a), |d, x| d * (x + x)))],
            Op::LogClamped { x, floor } => {
                vec![(*x, zip_map(g, val(x), |d, v| if v > *floor { d / v } else { T::zero() }))]
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut da = Tensor::zeros(&[m, k]);
                kernels::gemm_nt_acc(g.data(), bv.data(), da.data_mut(), m, n, k);
                let mut db = Tensor::zeros(&[k, n]);
                kernels::gemm_tn_acc(av.data(), g.data(), db.data_mut(), m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, transpose2(g))],
            Op::Softmax { x, axis, temperature } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut dx = Tensor::zeros(y.shape());
                let (yd, gd) = (y.data(), g.data());
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut s = T::zero();
                        for j in 0..len {
                            s += yd[base + j * inner] * gd[base + j * inner];
                        }
                        for j in 0..len {
                            let at = base + j * inner;
                            dx.data_mut()[at] = yd[at] * (gd[at] - s) / *temperature;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = T::lit(val(a).numel() as f64);
                vec![(*a, Tensor::full(val(a).shape(), g.item() / n))]
            }
            Op::Conv2d { x, w, geom, col } => {
                let (xv, wv) = (val(x), val(w));
                let cout = wv.shape()[0];
                let (k, p) = (geom.patch_len(), geom.out_pixels());
                let mut res = Vec::with_capacity(2);
                let cols: &[T] = match col {
                    Some(c) => c,
                    None if geom.is_pointwise() => xv.data(),
                    None => return Err(TensorError::Contract("conv2d column buffer missing".into())),
                };
                if self.requires_grad(*w) {
                    let mut dw = Tensor::zeros(wv.shape());
                    kernels::gemm_nt_acc(g.data(), cols, dw.data_mut(), cout, p, k);
                    res.push((*w, dw));
                }
                if self.requires_grad(*x) {
                    let mut dx = Tensor::zeros(xv.shape());
                    if geom.is_pointwise() {
                        kernels::gemm_tn_acc(wv.data(), g.data(), dx.data_mut(), cout, k, p);
                    } else {
                        let mut dcol = vec![T::zero(); k * p];
                        kernels::gemm_tn_acc(wv.data(), g.data(), &mut dcol, cout, k, p);
                        kernels::col2im_acc(&dcol, geom, dx.data_mut());
                    }
                    res.push((*x, dx));
                }
                res
            }
            Op::AvgPool2(a) => {
                let xs = val(a).shape();
                let nd = xs.len();
                let (h, w) = (xs[nd - 2], xs[nd - 1]);
                let (ho, wo) = (h / 2, w / 2);
                let c = g.numel() / (ho * wo);
                let quarter = T::lit(0.25);
                let mut dx = Tensor::zeros(xs);
                let dd = dx.data_mut();
                for ci in 0..c {
                    for yo in 0..ho {
                        for xo in 0..wo {
                            let v = g.data()[(ci * ho + yo) * wo + xo] * quarter;
                            let b = ci * h * w + 2 * yo * w + 2 * xo;
                            dd[b] += v;
                            dd[b + 1] += v;
                            dd[b + w] += v;
                            dd[b + w + 1] += v;
                        }
                    }
                }
                vec![(*a, dx)]
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(g.shape(), *axis);
                let mut bufs: Vec<Vec<T>> = parts.iter().map(|p| Vec::with_capacity(val(p).numel())).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (pi, p) in parts.iter().enumerate() {
                        let len = val(p).shape()[*axis] * inner;
                        bufs[pi].extend_from_slice(&g.data()[off..off + len]);
                        off += len;
                    }
                }
                parts
                    .iter()
                    .zip(bufs)
                    .map(|(p, b)| Ok((*p, Tensor::new(val(p).shape(), b)?)))
                    .collect::<Result<Vec<_>>>()?
            }
            Op::Slice { x, axis, start } => {
                let xs = val(x).shape();
                let (outer, full, inner) = axis_split(xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = Tensor::zeros(xs);
                for o in 0..outer {
                    let to = (o * full + start) * inner;
                    let from = o * len * inner;
                    dx.data_mut()[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                }
                vec![(*x, dx)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(a).shape())?)],
            Op::Gather { x, idx } => {
                let mut dx = Tensor::zeros(val(x).shape());
                for (&i, &d) in idx.iter().zip(g.data()) {
                    dx.data_mut()[i] += d;
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = (g.shape()[0], g.shape()[1]);
                let gam = val(gamma).data();
                let mut dx = Tensor::zeros(&[n, c]);
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let cn = T::lit(c as f64);
                for r in 0..n {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let dxh = gr[j] * gam[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                    for j in 0..c {
                        let dxh = gr[j] * gam[j];
                        dx.data_mut()[r * c + j] = inv_std[r] / cn * (cn * dxh - s1 - xr[j] * s2);
                    }
                }
                vec![
                    (*x, dx),
                    (*gamma, Tensor::new(val(gamma).shape(), dg)?),
                    (*beta, Tensor::new(val(beta).shape(), db)?),
                ]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| val(v)).collect();
                let grads = op.backward(&ins, y, g)?;
                if grads.len() != inputs.len() {
                    return Err(TensorError::Contract(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, g)| g.map(|g| (*v, g)))
                    .collect()
            }
        };
        Ok(out)
    }
}

fn transpose2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[c, r]);
    let (src, dst) = (x.data(), out.data_mut());
    for i in 0..r {
        for j in 0..c {
            dst[j * r + i] = src[i * c + j];
        }
    }
    out
}
