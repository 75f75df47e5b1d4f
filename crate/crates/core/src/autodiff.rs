//! Reverse-mode differentiation over a recorded tape of array operations.
//!
//! Every intermediate value is kept on the [`Tape`]; nodes created from
//! constants do not propagate gradient, so a forward pass over frozen weights
//! only pays the backward cost along paths that touch a trainable leaf.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One bilinear (or general linear) tap: column index and weight.
pub type Taps<T> = Vec<(usize, T)>;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowVec(Var, Var),
    AddColVec(Var, Var),
    Silu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    Concat0(Vec<Var>),
    ConcatCols(Var, Var),
    Transpose(Var),
    Reshape(Var),
    SoftmaxRows {
        x: Var,
        scale: T,
    },
    MaxPoolRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRowsBroadcast(Var),
    NormalizeCols {
        x: Var,
        norms: Vec<T>,
    },
    MixCols {
        x: Var,
        taps: Vec<Taps<T>>,
    },
    ChannelNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        target: Vec<T>,
        scale: T,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Columns whose norm falls below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Variance floor of [`Tape::channel_norm`].
pub const CHANNEL_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that requires one.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected a matrix, got shape {s:?}");
    (s[0], s[1])
}

fn dims3<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 3, "expected a [C, H, W] array, got shape {s:?}");
    (s[0], s[1], s[2])
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

/// `a[m,k] · b[k,n]`.
pub fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a));
        let (k2, n) = dims2(self.value(b));
        if k != k2 {
            return Err(Error::Shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// `a[m,n] + b[n]` broadcast over rows.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a));
        if self.value(b).len() != n {
            return Err(Error::Shape(format!(
                "row bias of length {} for [{m},{n}]",
                self.value(b).len()
            )));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + bv[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], data)?, Op::AddRowVec(a, b), rg))
    }

    /// `a[m,n] + b[m]` broadcast over columns.
    pub fn add_col_vec(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a));
        if self.value(b).len() != m {
            return Err(Error::Shape(format!(
                "column bias of length {} for [{m},{n}]",
                self.value(b).len()
            )));
        }
        let bv = self.value(b).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + bv[i];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, n], data)?, Op::AddColVec(a, b), rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(silu);
        let rg = self.rg(a);
        self.push(value, Op::Silu(a), rg)
    }

    /// 2-D convolution of `x[C,H,W]` with `w[O,C,K,K]` and bias `b[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = dims3(self.value(x));
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv weight {ws:?} for input with {c} channels")));
        }
        let (o, k) = (ws[0], ws[2]);
        if self.value(b).len() != o {
            return Err(Error::Shape(format!("conv bias length {}", self.value(b).len())));
        }
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::Shape(format!("input {h}x{wd} too small for kernel {k}")));
        }
        let oh = conv_out_size(h, k, stride, pad);
        let ow = conv_out_size(wd, k, stride, pad);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); o * oh * ow];
        for oc in 0..o {
            let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
            plane.iter_mut().for_each(|v| *v = bv[oc]);
            for ic in 0..c {
                let xplane = &xv[ic * h * wd..(ic + 1) * h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((oc * c + ic) * k + ky) * k + kx];
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    *ov = *ov + wt * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::from_vec(&[o, oh, ow], out)?,
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling of `[C,H,W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[c, 2 * h, 2 * w], out).expect("upsample shape"),
            Op::Upsample2x(x),
            rg,
        )
    }

    /// Concatenation along the leading axis; trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::Shape(format!("concat {s:?} with trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat0(parts.to_vec()), rg))
    }

    /// `[m,a] ++ [m,b] -> [m,a+b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = dims2(self.value(a));
        let (m2, nb) = dims2(self.value(b));
        if m != m2 {
            return Err(Error::Shape(format!("concat_cols rows {m} vs {m2}")));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            data.extend_from_slice(&av[i * na..(i + 1) * na]);
            data.extend_from_slice(&bv[i * nb..(i + 1) * nb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[m, na + nb], data)?, Op::ConcatCols(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = dims2(self.value(a));
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(a);
        self.push(
            Tensor::from_vec(&[n, m], data).expect("transpose shape"),
            Op::Transpose(a),
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Row-wise softmax of `scale * x`.
    pub fn softmax_rows(&mut self, x: Var, scale: T) -> Var {
        let (m, n) = dims2(self.value(x));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_into(&xv[i * n..(i + 1) * n], scale, &mut out[i * n..(i + 1) * n]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[m, n], out).expect("softmax shape"),
            Op::SoftmaxRows { x, scale },
            rg,
        )
    }

    /// Adaptive max pooling of the row axis of `x[n,d]` down to `bins` rows;
    /// bin `i` covers rows `[floor(i*n/bins), ceil((i+1)*n/bins))`, so
    /// neighbouring bins overlap when `bins` does not divide `n`.
    pub fn max_pool_rows(&mut self, x: Var, bins: usize) -> Result<Var> {
        let (n, d) = dims2(self.value(x));
        if bins == 0 || bins > n {
            return Err(Error::Parameter(format!("cannot pool {n} rows into {bins} bins")));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); bins * d];
        let mut argmax = vec![0usize; bins * d];
        for i in 0..bins {
            let (lo, hi) = adaptive_bin(i, n, bins);
            for j in 0..d {
                let mut best = lo;
                for r in lo + 1..hi {
                    if xv[r * d + j] > xv[best * d + j] {
                        best = r;
                    }
                }
                out[i * d + j] = xv[best * d + j];
                argmax[i * d + j] = best * d + j;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[bins, d], out)?, Op::MaxPoolRows { x, argmax }, rg))
    }

    /// Replaces every row of `x[n,d]` by the mean row.
    pub fn mean_rows_broadcast(&mut self, x: Var) -> Var {
        let (n, d) = dims2(self.value(x));
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize_exact(n);
        let mut mean = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                mean[j] = mean[j] + xv[i * d + j];
            }
        }
        mean.iter_mut().for_each(|v| *v = *v * inv);
        let data = (0..n).flat_map(|_| mean.iter().copied()).collect();
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[n, d], data).expect("mean shape"),
            Op::MeanRowsBroadcast(x),
            rg,
        )
    }

    /// Divides each column of `x[c,m]` by its Euclidean norm; columns with
    /// norm below [`NORM_EPS`] become zero.
    pub fn normalize_cols(&mut self, x: Var) -> Var {
        let (c, m) = dims2(self.value(x));
        let xv = self.value(x).data();
        let norms = column_norms(xv, c, m);
        let mut out = vec![T::zero(); c * m];
        let eps = T::lit(NORM_EPS);
        for j in 0..m {
            if norms[j] < eps {
                continue;
            }
            for i in 0..c {
                out[i * m + j] = xv[i * m + j] / norms[j];
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[c, m], out).expect("normalize shape"),
            Op::NormalizeCols { x, norms },
            rg,
        )
    }

    /// Standardises every channel of `x[C,H,W]` over its spatial positions
    /// (instance normalisation without affine terms).
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let (c, h, w) = dims3(self.value(x));
        let n = h * w;
        let xv = self.value(x).data();
        let nn = T::from_usize_exact(n);
        let eps = T::lit(CHANNEL_NORM_EPS);
        let mut out = vec![T::zero(); c * n];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &xv[ch * n..(ch + 1) * n];
            let mean = plane.iter().copied().sum::<T>() / nn;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nn;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(plane) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&[c, h, w], out).expect("channel norm shape"),
            Op::ChannelNorm { x, inv_std },
            rg,
        )
    }

    /// Output column `q` is `sum_k w_k * x[:, idx_k]` over `taps[q]`.
    pub fn mix_cols(&mut self, x: Var, taps: Vec<Taps<T>>) -> Result<Var> {
        let (c, m) = dims2(self.value(x));
        let q = taps.len();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); c * q];
        for (j, tap) in taps.iter().enumerate() {
            for &(idx, w) in tap {
                if idx >= m {
                    return Err(Error::Shape(format!("tap column {idx} of {m}")));
                }
                for i in 0..c {
                    out[i * q + j] = out[i * q + j] + w * xv[i * m + idx];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, q], out)?, Op::MixCols { x, taps }, rg))
    }

    /// Mean over rows of the cross-entropy between `target` rows and
    /// `softmax(scale * logits)` rows. Returns a `[1]` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: &Tensor<T>, scale: T) -> Result<Var> {
        let (n, m) = dims2(self.value(logits));
        if target.len() != n * m {
            return Err(Error::Shape(format!(
                "target of {} entries for logits [{n},{m}]",
                target.len()
            )));
        }
        if n == 0 {
            return Err(Error::Parameter("cross-entropy over zero rows".into()));
        }
        let lv = self.value(logits).data();
        let tv = target.data();
        let mut probs = vec![T::zero(); n * m];
        let mut total = T::zero();
        for r in 0..n {
            let row = &lv[r * m..(r + 1) * m];
            let lse = log_sum_exp(row, scale);
            softmax_into(row, scale, &mut probs[r * m..(r + 1) * m]);
            for i in 0..m {
                let t = tv[r * m + i];
                if t != T::zero() {
                    total = total - t * (scale * row[i] - lse);
                }
            }
        }
        let loss = total / T::from_usize_exact(n);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_vec(&[1], vec![loss])?,
            Op::SoftmaxXent {
                logits,
                target: tv.to_vec(),
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        if self.rg(root) {
            grads[root.0] = Some(vec![T::one(); self.nodes[root.0].value.len()]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.value(*a));
                let (_, n) = dims2(self.value(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    // dA = G · B^T
                    let bt = transpose_raw(bv, k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.acc(grads, *a, |s| add_into(s, &da));
                }
                if self.rg(*b) {
                    // dB = A^T · G
                    let at = transpose_raw(av, m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    self.acc(grads, *b, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| add_into(s, g));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * *k;
                    }
                });
            }
            Op::AddRowVec(a, b) => {
                let (m, n) = dims2(self.value(*a));
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[j] = s[j] + g[i * n + j];
                        }
                    }
                });
            }
            Op::AddColVec(a, b) => {
                let (m, n) = dims2(self.value(*a));
                self.acc(grads, *a, |s| add_into(s, g));
                self.acc(grads, *b, |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i] = s[i] + g[i * n + j];
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * silu_grad(av[i]);
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(node, *x, *w, *b, *stride, *pad, g, grads),
            Op::Upsample2x(x) => {
                let (c, h, w) = dims3(self.value(*x));
                self.acc(grads, *x, |s| {
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let si = (ch * h + y / 2) * w + xx / 2;
                                s[si] = s[si] + g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let slice = &g[off..off + len];
                    self.acc(grads, p, |s| add_into(s, slice));
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (m, na) = dims2(self.value(*a));
                let (_, nb) = dims2(self.value(*b));
                let w = na + nb;
                self.acc(grads, *a, |s| {
                    for i in 0..m {
                        for j in 0..na {
                            s[i * na + j] = s[i * na + j] + g[i * w + j];
                        }
                    }
                });
                self.acc(grads, *b, |s| {
                    for i in 0..m {
                        for j in 0..nb {
                            s[i * nb + j] = s[i * nb + j] + g[i * w + na + j];
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = dims2(self.value(*a));
                // g is [n, m]
                let gt = transpose_raw(g, n, m);
                self.acc(grads, *a, |s| add_into(s, &gt));
            }
            Op::Reshape(a) => self.acc(grads, *a, |s| add_into(s, g)),
            Op::SoftmaxRows { x, scale } => {
                let (m, n) = dims2(&node.value);
                let y = node.value.data();
                self.acc(grads, *x, |s| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            s[i * n + j] = s[i * n + j] + *scale * yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::MaxPoolRows { x, argmax } => {
                self.acc(grads, *x, |s| {
                    for (o, &src) in argmax.iter().enumerate() {
                        s[src] = s[src] + g[o];
                    }
                });
            }
            Op::MeanRowsBroadcast(x) => {
                let (n, d) = dims2(self.value(*x));
                let inv = T::one() / T::from_usize_exact(n);
                let mut col = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        col[j] = col[j] + g[i * d + j];
                    }
                }
                self.acc(grads, *x, |s| {
                    for i in 0..n {
                        for j in 0..d {
                            s[i * d + j] = s[i * d + j] + col[j] * inv;
                        }
                    }
                });
            }
            Op::NormalizeCols { x, norms } => {
                let (c, m) = dims2(&node.value);
                let y = node.value.data();
                let eps = T::lit(NORM_EPS);
                self.acc(grads, *x, |s| {
                    for j in 0..m {
                        if norms[j] < eps {
                            continue;
                        }
                        let mut dot = T::zero();
                        for i in 0..c {
                            dot = dot + y[i * m + j] * g[i * m + j];
                        }
                        for i in 0..c {
                            let k = i * m + j;
                            s[k] = s[k] + (g[k] - y[k] * dot) / norms[j];
                        }
                    }
                });
            }
            Op::ChannelNorm { x, inv_std } => {
                let (c, h, w) = dims3(&node.value);
                let n = h * w;
                let nn = T::from_usize_exact(n);
                let y = node.value.data();
                self.acc(grads, *x, |s| {
                    for ch in 0..c {
                        let r = ch * n..(ch + 1) * n;
                        let gsum = g[r.clone()].iter().copied().sum::<T>();
                        let gy = g[r.clone()].iter().zip(&y[r.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                        for k in r {
                            s[k] = s[k] + inv_std[ch] * (g[k] - (gsum + y[k] * gy) / nn);
                        }
                    }
                });
            }
            Op::MixCols { x, taps } => {
                let (c, m) = dims2(self.value(*x));
                let q = taps.len();
                self.acc(grads, *x, |s| {
                    for (j, tap) in taps.iter().enumerate() {
                        for &(idx, w) in tap {
                            for i in 0..c {
                                s[i * m + idx] = s[i * m + idx] + w * g[i * q + j];
                            }
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                target,
                scale,
                probs,
            } => {
                let (n, m) = dims2(self.value(*logits));
                let k = g[0] * *scale / T::from_usize_exact(n);
                self.acc(grads, *logits, |s| {
                    for r in 0..n {
                        let tsum: T = target[r * m..(r + 1) * m].iter().copied().sum();
                        for i in 0..m {
                            let idx = r * m + i;
                            s[idx] = s[idx] + k * (probs[idx] * tsum - target[idx]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node<T>,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (c, h, wd) = dims3(self.value(x));
        let ws = self.value(w).shape();
        let (o, k) = (ws[0], ws[2]);
        let (_, oh, ow) = dims3(&node.value);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let for_each_tap = |f: &mut dyn FnMut(usize, usize, usize)| {
            // f(out_index, in_index, weight_index)
            for oc in 0..o {
                for ic in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wi = ((oc * c + ic) * k + ky) * k + kx;
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let oi = (oc * oh + oy) * ow + ox;
                                    let ii = (ic * h + iy as usize) * wd + ix as usize;
                                    f(oi, ii, wi);
                                }
                            }
                        }
                    }
                }
            }
        };
        if self.rg(x) {
            let mut dx = vec![T::zero(); xv.len()];
            for_each_tap(&mut |oi, ii, wi| dx[ii] = dx[ii] + wv[wi] * g[oi]);
            self.acc(grads, x, |s| add_into(s, &dx));
        }
        if self.rg(w) {
            let mut dw = vec![T::zero(); wv.len()];
            for_each_tap(&mut |oi, ii, wi| dw[wi] = dw[wi] + xv[ii] * g[oi]);
            self.acc(grads, w, |s| add_into(s, &dw));
        }
        self.acc(grads, b, |s| {
            for oc in 0..o {
                let plane: T = g[oc * oh * ow..(oc + 1) * oh * ow].iter().copied().sum();
                s[oc] = s[oc] + plane;
            }
        });
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

/// Half-open row range of adaptive-pooling bin `i` of `bins` over `n` rows.
pub fn adaptive_bin(i: usize, n: usize, bins: usize) -> (usize, usize) {
    (i * n / bins, ((i + 1) * n).div_ceil(bins))
}

pub fn column_norms<T: Scalar>(x: &[T], c: usize, m: usize) -> Vec<T> {
    (0..m)
        .map(|j| (0..c).map(|i| x[i * m + j] * x[i * m + j]).sum::<T>().sqrt())
        .collect()
}

/// `log(sum_i exp(scale * x_i))` with max subtraction.
pub fn log_sum_exp<T: Scalar>(x: &[T], scale: T) -> T {
    let mx = x.iter().map(|&v| v * scale).fold(T::neg_infinity(), T::max);
    let s: T = x.iter().map(|&v| (v * scale - mx).exp()).sum();
    mx + s.ln()
}

/// Softmax of `scale * x` into `out`, stabilised by subtracting the maximum.
pub fn softmax_into<T: Scalar>(x: &[T], scale: T, out: &mut [T]) {
    let mx = x.iter().map(|&v| v * scale).fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v * scale - mx).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Checks d(sum(out * probe))/d(leaf) against central differences.
    fn check_op(shape: &[usize], build: impl Fn(&mut Tape<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let probe_shape = {
            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let y = build(&mut t, x);
            t.shape(y).to_vec()
        };
        let probe = Tensor::<f64>::randn(&probe_shape, 1.0, &mut rng);
        let eval = |x: &Tensor<f64>| -> f64 {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let y = build(&mut t, xv);
            t.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let y = build(&mut t, xv);
        let p = t.constant(probe.clone());
        let prod = t.mul(y, p).unwrap();
        let n = t.shape(prod).iter().product();
        let flat = t.reshape(prod, &[1, n]).unwrap();
        let ones = t.constant(Tensor::full(&[n, 1], 1.0));
        let s = t.matmul(flat, ones).unwrap();
        let grads = t.backward(s);
        let analytic = grads.get(xv);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!(err < 1e-5, "entry {i}: fd {fd} vs analytic {}", analytic[i]);
        }
    }

    #[test]
    fn matmul_and_transpose_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        check_op(&[2, 4], |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv).unwrap();
            t.transpose(y)
        });
        check_op(&[4, 3], |t, x| {
            let a = t.transpose(x);
            t.matmul(a, x).unwrap()
        });
    }

    #[test]
    fn conv_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::<f64>::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[3], 0.5, &mut rng);
        for stride in [1, 2] {
            check_op(&[2, 5, 6], |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                t.conv2d(x, wv, bv, stride, 1).unwrap()
            });
        }
        let x = Tensor::<f64>::randn(&[2, 5, 6], 1.0, &mut rng);
        check_op(&[3, 2, 3, 3], |t, wv| {
            let xv = t.constant(x.clone());
            let bv = t.constant(b.clone());
            t.conv2d(xv, wv, bv, 2, 1).unwrap()
        });
    }

    #[test]
    fn elementwise_and_structural_grads() {
        check_op(&[2, 3, 3], |t, x| {
            let s = t.silu(x);
            t.upsample2x(s)
        });
        check_op(&[3, 4], |t, x| t.softmax_rows(x, 2.5));
        check_op(&[6, 3], |t, x| t.max_pool_rows(x, 4).unwrap());
        check_op(&[5, 3], |t, x| t.mean_rows_broadcast(x));
        check_op(&[4, 5], |t, x| t.normalize_cols(x));
        check_op(&[2, 3, 4], |t, x| t.channel_norm(x));
        check_op(&[3, 4], |t, x| {
            let y = t.scale(x, 0.5);
            let c = t.concat_cols(x, y).unwrap();
            let d = t.concat0(&[c, c]).unwrap();
            let e = t.mul(d, d).unwrap();
            t.add(e, d).unwrap()
        });
        check_op(&[3, 4], |t, x| {
            t.mix_cols(x, vec![vec![(0, 0.25), (3, 0.75)], vec![(2, 1.0)]]).unwrap()
        });
        check_op(&[3, 4], |t, x| {
            let r = t.constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let c = t.constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 1.0]).unwrap());
            let y = t.add_row_vec(x, r).unwrap();
            t.add_col_vec(y, c).unwrap()
        });
    }

    #[test]
    fn cross_entropy_grad() {
        let target = Tensor::from_vec(&[2, 3], vec![0.2, 0.5, 0.3, 0.0, 1.0, 0.0]).unwrap();
        check_op(&[2, 3], |t, x| t.softmax_cross_entropy(x, &target, 3.0).unwrap());
    }

    #[test]
    fn pool_bins_cover_all_rows() {
        for n in 1..20 {
            for bins in 1..=n {
                let mut covered = 0;
                for i in 0..bins {
                    let (lo, hi) = adaptive_bin(i, n, bins);
                    assert!(lo <= covered && hi > covered);
                    assert!(hi - lo <= n.div_ceil(bins) + 1);
                    covered = hi;
                }
                assert_eq!(covered, n);
            }
        }
    }
}
